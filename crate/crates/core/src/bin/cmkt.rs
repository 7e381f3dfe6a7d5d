fn main() {
    std::process::exit(cmkt::cli::run(std::env::args_os()));
}
