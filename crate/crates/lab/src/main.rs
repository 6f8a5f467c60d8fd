fn main() {
    std::process::exit(stp_lab::cli::cli_main(std::env::args_os()));
}
