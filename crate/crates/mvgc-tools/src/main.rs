fn main() {
    std::process::exit(mvgc_tools::run());
}
