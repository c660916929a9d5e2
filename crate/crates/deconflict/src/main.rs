fn main() {
    std::process::exit(deconflict::cli::main_with(std::env::args_os()));
}
