fn main() {
    std::process::exit(shelllab_cli::run(std::env::args_os()));
}
