fn main() {
    std::process::exit(blurnet::cli::run(std::env::args_os()));
}
