fn main() {
    std::process::exit(voxseg::cli::run(std::env::args()));
}
