fn main() {
    std::process::exit(blade::cli::run(std::env::args_os()));
}
