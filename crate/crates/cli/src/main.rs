fn main() {
    std::process::exit(msae_cli::run(std::env::args_os()));
}
