fn main() {
    std::process::exit(introspect_cli::run(std::env::args_os()));
}
