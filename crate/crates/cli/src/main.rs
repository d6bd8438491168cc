fn main() {
    std::process::exit(adamct_cli::run(std::env::args_os()));
}
