fn main() {
    std::process::exit(srvae::cli::run(std::env::args()));
}
