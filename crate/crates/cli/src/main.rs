fn main() {
    std::process::exit(longattn_cli::run(std::env::args_os()));
}
