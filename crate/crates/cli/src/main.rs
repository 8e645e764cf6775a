fn main() {
    std::process::exit(emosim_cli::main_with(std::env::args_os()));
}
