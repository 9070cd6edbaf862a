fn main() {
    std::process::exit(vgl_lab::cli::main_with_args(std::env::args_os()));
}
