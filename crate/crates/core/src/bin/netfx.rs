fn main() {
    std::process::exit(netfx::cli::run(std::env::args_os()));
}
