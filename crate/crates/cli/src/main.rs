fn main() {
    std::process::exit(gradphi_cli::main_with(std::env::args_os()));
}
