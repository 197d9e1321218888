fn main() {
    std::process::exit(mobileiqa::cli::run());
}
