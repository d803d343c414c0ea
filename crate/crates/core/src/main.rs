fn main() {
    std::process::exit(rtip::cli::run(std::env::args_os()));
}
