fn main() {
    // Die quietly when stdout closes early (e.g. piped into `head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(lungcds::cli::run(std::env::args_os()));
}
