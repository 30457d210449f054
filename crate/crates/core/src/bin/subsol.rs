fn main() {
    std::process::exit(subsol::cli::main_with(std::env::args_os()));
}
