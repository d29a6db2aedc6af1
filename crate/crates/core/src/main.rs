fn main() {
    std::process::exit(tadformer::cli::main_with(std::env::args_os()));
}
