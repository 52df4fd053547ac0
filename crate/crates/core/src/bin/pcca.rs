fn main() {
    std::process::exit(pcca::cli::main_from(std::env::args_os()));
}
