fn main() {
    std::process::exit(dinomaly_cli::run(std::env::args_os()));
}
