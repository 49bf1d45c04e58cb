fn main() {
    std::process::exit(modalgate_cli::dispatch(std::env::args_os()));
}
