//! Benchmark and validation runner for the mini-applications.
//!
//! Parses a configuration from flags, runs the requested application (or
//! the whole suite) on the thread fabric, and prints one report per run to
//! standard output in JSON lines, CSV, or an aligned human table.
//! Diagnostics go to standard error.
//!
//! Exit codes: 0 when every run is valid (or validation is off), 1 when
//! any validity check fails, 2 on usage errors.

use clap::{Parser, ValueEnum};
use fabsp_miniapps::{run_app, App, AppConfig, AppReport};

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AppArg {
    Histogram,
    Ig,
    Permute,
    Randperm,
    Toposort,
    Transpose,
    Triangles,
    All,
}

impl AppArg {
    fn apps(self) -> Vec<App> {
        match self {
            AppArg::Histogram => vec![App::Histogram],
            AppArg::Ig => vec![App::IndexGather],
            AppArg::Permute => vec![App::PermuteMatrix],
            AppArg::Randperm => vec![App::RandomPermutation],
            AppArg::Toposort => vec![App::TopologicalSort],
            AppArg::Transpose => vec![App::Transpose],
            AppArg::Triangles => vec![App::TriangleCount],
            AppArg::All => App::ALL.to_vec(),
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
    Human,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Runs irregular-communication mini-apps on the aggregating actor fabric
/// and reports timing, message statistics, and oracle validity.
#[derive(Parser, Debug)]
#[command(name = "fabsp-bench", version)]
struct Cli {
    /// Application to run, or `all` for the whole suite
    #[arg(long, value_enum)]
    app: AppArg,

    /// Number of processing elements (one OS thread each)
    #[arg(long, env = "FABSP_PES", default_value_t = 4,
          value_parser = clap::value_parser!(u64).range(1..))]
    pes: u64,

    /// Histogram: update count per PE
    #[arg(long, default_value_t = 100_000)]
    updates_per_pe: u64,

    /// Histogram / index-gather: table entries per PE
    #[arg(long, default_value_t = 1_000)]
    table_per_pe: u64,

    /// Index-gather: read count per PE
    #[arg(long, default_value_t = 100_000)]
    reads_per_pe: u64,

    /// Matrix apps: rows per PE
    #[arg(long, default_value_t = 1_000)]
    rows_per_pe: u64,

    /// Matrix apps: mean nonzeros per row
    #[arg(long, default_value_t = 10)]
    nnz_per_row: u64,

    /// Random permutation: elements per PE
    #[arg(long, default_value_t = 10_000)]
    elements_per_pe: u64,

    /// Seed for every pseudo-random stream
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Items buffered per destination before a frame is sent (B)
    #[arg(long, default_value_t = 1024,
          value_parser = clap::value_parser!(u64).range(1..))]
    buffer_items: u64,

    /// Mailbox ring capacity in items (C)
    #[arg(long, default_value_t = 64,
          value_parser = clap::value_parser!(u64).range(1..))]
    ring_capacity: u64,

    /// Per-PE transport inbox capacity in frames
    #[arg(long, default_value_t = 64,
          value_parser = clap::value_parser!(u64).range(1..))]
    inbox_capacity: u64,

    /// Report format
    #[arg(long, value_enum, default_value_t = Format::Human)]
    format: Format,

    /// Check results against the serial oracles (super-linear for some
    /// apps; turn off for runs beyond oracle scale)
    #[arg(long, value_enum, default_value_t = Switch::On)]
    validate: Switch,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if err.kind() == clap::error::ErrorKind::MissingRequiredArgument {
                err.print().expect("stderr");
                eprintln!(
                    "apps: histogram, ig, permute, randperm, toposort, transpose, triangles, all"
                );
                std::process::exit(2);
            }
            // Prints to stderr and exits 2 for usage errors; prints to
            // stdout and exits 0 for --help / --version.
            err.exit();
        }
    };

    let cfg = AppConfig {
        pes: cli.pes as usize,
        updates_per_pe: cli.updates_per_pe,
        table_per_pe: cli.table_per_pe,
        reads_per_pe: cli.reads_per_pe,
        rows_per_pe: cli.rows_per_pe,
        nnz_per_row: cli.nnz_per_row,
        elements_per_pe: cli.elements_per_pe,
        seed: cli.seed,
        buffer_items: cli.buffer_items as usize,
        ring_capacity: cli.ring_capacity as usize,
        inbox_capacity: cli.inbox_capacity as usize,
        validate: matches!(cli.validate, Switch::On),
        step_limit: None,
    };

    let reports: Vec<AppReport> = cli
        .app
        .apps()
        .into_iter()
        .map(|app| run_app(app, &cfg))
        .collect();

    match cli.format {
        Format::Json => emit_json(&reports),
        Format::Csv => emit_csv(&reports),
        Format::Human => emit_human(&reports),
    }
    for report in &reports {
        if report.valid == Some(false) {
            eprintln!("validity failure: {}", report.app);
        }
    }
    std::process::exit(exit_code(&reports));
}

/// 0 when every run passed (or skipped) validation, 1 otherwise.
fn exit_code(reports: &[AppReport]) -> i32 {
    if reports.iter().any(|r| r.valid == Some(false)) {
        1
    } else {
        0
    }
}

fn emit_json(reports: &[AppReport]) {
    for report in reports {
        println!(
            "{}",
            serde_json::to_string(report).expect("report serializes")
        );
    }
}

/// `sizes` as `key=value` pairs joined with `;` — one CSV column for every
/// app. BTreeMap iteration keeps the key order stable.
fn sizes_cell(report: &AppReport) -> String {
    report
        .sizes
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn option_cell(value: Option<impl ToString>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

const COLUMNS: [&str; 14] = [
    "app",
    "pes",
    "seed",
    "sizes",
    "buffer_items",
    "ring_capacity",
    "inbox_capacity",
    "wall_time_seconds",
    "items_sent_total",
    "frames_sent_total",
    "aggregation_ratio",
    "valid",
    "checksum",
    "rounds",
];

fn row_cells(report: &AppReport) -> [String; 14] {
    [
        report.app.clone(),
        report.pes.to_string(),
        report.seed.to_string(),
        sizes_cell(report),
        report.buffer_items.to_string(),
        report.ring_capacity.to_string(),
        report.inbox_capacity.to_string(),
        // f64 Display prints the shortest representation that parses back
        // to the same value, so these cells round-trip.
        report.wall_time_seconds.to_string(),
        report.items_sent_total.to_string(),
        report.frames_sent_total.to_string(),
        report.aggregation_ratio.to_string(),
        option_cell(report.valid),
        report.checksum.clone(),
        option_cell(report.rounds),
    ]
}

// No cell can contain a comma, quote, or newline: app names are fixed
// identifiers, numbers and hex digests are plain, and the sizes cell joins
// `key=value` pairs with `;`. Plain joining is therefore valid CSV.
fn emit_csv(reports: &[AppReport]) {
    println!("{}", COLUMNS.join(","));
    for report in reports {
        println!("{}", row_cells(report).join(","));
    }
}

fn emit_human(reports: &[AppReport]) {
    let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut rows: Vec<Vec<String>> = vec![header];
    for report in reports {
        let mut cells = row_cells(report).to_vec();
        // Tidy the floats for reading; full precision lives in json/csv.
        cells[7] = format!("{:.4}", report.wall_time_seconds);
        cells[10] = format!("{:.2}", report.aggregation_ratio);
        if cells[11].is_empty() {
            cells[11] = "-".into();
        }
        if cells[13].is_empty() {
            cells[13] = "-".into();
        }
        rows.push(cells);
    }
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }
}
