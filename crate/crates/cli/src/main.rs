fn main() {
    std::process::exit(compdiff_cli::main_with_args(std::env::args_os()));
}
