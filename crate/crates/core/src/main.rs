fn main() {
    std::process::exit(mixlora::cli::main_with(std::env::args_os()));
}
