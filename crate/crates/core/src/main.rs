fn main() {
    std::process::exit(cjcrf::cli::run(std::env::args_os()));
}
