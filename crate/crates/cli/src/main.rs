fn main() {
    std::process::exit(infinet_cli::main_with_args(std::env::args_os()));
}
