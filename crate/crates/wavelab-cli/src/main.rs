fn main() {
    std::process::exit(wavelab_cli::main_from(std::env::args_os()));
}
