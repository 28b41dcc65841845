fn main() {
    std::process::exit(segimprint::cli::run(std::env::args_os()));
}
