fn main() {
    std::process::exit(pcstyle::cli::run(std::env::args_os()));
}
