fn main() {
    std::process::exit(nearid::cli::run(std::env::args_os()));
}
