fn main() {
    std::process::exit(sak_tomography::cli::run(std::env::args_os()));
}
