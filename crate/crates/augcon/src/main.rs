fn main() {
    std::process::exit(augcon::cli::run());
}
