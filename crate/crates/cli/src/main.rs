fn main() {
    std::process::exit(spherewarp_cli::run(std::env::args().collect()));
}
