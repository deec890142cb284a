fn main() {
    std::process::exit(spanet::cli::run());
}
