fn main() {
    std::process::exit(nmsparse::cli::run(std::env::args_os()));
}
