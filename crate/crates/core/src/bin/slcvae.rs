fn main() {
    std::process::exit(slcvae::cli::run(std::env::args_os()));
}
