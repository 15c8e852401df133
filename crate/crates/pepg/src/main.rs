fn main() {
    std::process::exit(pepg::cli::main_with_args(std::env::args_os()));
}
