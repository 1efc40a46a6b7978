fn main() {
    std::process::exit(dswm::harness::cli::run());
}
