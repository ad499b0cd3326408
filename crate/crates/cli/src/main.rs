fn main() {
    std::process::exit(setclust_cli::run(std::env::args_os()));
}
