fn main() {
    std::process::exit(milpath_cli::run(std::env::args_os()));
}
