fn main() {
    std::process::exit(ssl_mtpp::cli::run(std::env::args_os()));
}
