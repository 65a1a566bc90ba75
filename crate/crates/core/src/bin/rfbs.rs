fn main() {
    std::process::exit(rfbsnet::cli::run(std::env::args_os()));
}
