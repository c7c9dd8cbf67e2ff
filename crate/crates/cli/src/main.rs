fn main() {
    std::process::exit(xsight_cli::cli::run(std::env::args_os()));
}
