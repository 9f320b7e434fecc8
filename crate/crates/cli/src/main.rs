fn main() {
    std::process::exit(scq_cli::main_with_args(std::env::args_os()));
}
