fn main() {
    std::process::exit(transwarp::cli::run());
}
