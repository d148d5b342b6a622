fn main() {
    std::process::exit(csitr_cli::main_with(std::env::args_os()));
}
