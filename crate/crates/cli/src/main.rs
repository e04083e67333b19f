fn main() {
    std::process::exit(tactica_cli::dispatch(std::env::args_os()));
}
