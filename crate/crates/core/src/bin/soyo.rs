fn main() {
    std::process::exit(soyo_core::cli::cli_main(std::env::args_os()));
}
