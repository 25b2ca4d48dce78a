fn main() {
    std::process::exit(msma::cli::run(std::env::args_os()));
}
