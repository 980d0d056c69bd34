fn main() {
    std::process::exit(treemap::cli::run(std::env::args_os()));
}
