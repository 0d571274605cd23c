fn main() {
    std::process::exit(camm_cli::run(std::env::args_os()));
}
