fn main() {
    std::process::exit(rdk::cli::run(std::env::args_os()));
}
