fn main() {
    std::process::exit(adafusion::cli::main());
}
