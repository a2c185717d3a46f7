fn main() {
    std::process::exit(ntk_ln::cli::main_with_args(std::env::args_os()));
}
