fn main() {
    std::process::exit(itm::cli::run(std::env::args_os()));
}
