fn main() {
    std::process::exit(hint_service::cli::main_with_args(std::env::args_os()));
}
