fn main() {
    std::process::exit(scrlab::runner::run(std::env::args_os()));
}
