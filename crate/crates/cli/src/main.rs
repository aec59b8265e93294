fn main() {
    std::process::exit(ecakp_cli::app::main());
}
