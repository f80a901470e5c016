fn main() {
    std::process::exit(rsma_globopt::cli::main_with_args(std::env::args_os()));
}
