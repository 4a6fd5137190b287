fn main() {
    std::process::exit(prof_core::cli::main_with_args(std::env::args_os()));
}
