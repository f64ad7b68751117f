fn main() {
    std::process::exit(semiseg::cli::main_with_args(std::env::args_os()));
}
