fn main() {
    std::process::exit(aalbert::cli::run());
}
