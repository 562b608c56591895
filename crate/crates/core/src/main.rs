fn main() {
    std::process::exit(wordstyle::cli::run(std::env::args_os()));
}
