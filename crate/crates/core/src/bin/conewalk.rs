fn main() {
    std::process::exit(conewalk::cli::run(std::env::args_os()));
}
