fn main() {
    std::process::exit(gvtnet_cli::dispatch(std::env::args_os()));
}
