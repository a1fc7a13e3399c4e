fn main() {
    std::process::exit(facemark::cli::main_with(std::env::args_os()));
}
