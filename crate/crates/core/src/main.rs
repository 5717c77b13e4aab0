fn main() {
    std::process::exit(nce_lab::cli::main_with_args(std::env::args_os()));
}
