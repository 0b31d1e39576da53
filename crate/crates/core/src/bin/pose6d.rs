fn main() {
    std::process::exit(pose6d::cli::run(std::env::args_os()));
}
