fn main() {
    std::process::exit(dwellrec::cli::dispatch(std::env::args_os()));
}
