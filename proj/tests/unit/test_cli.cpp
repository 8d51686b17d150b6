#include <sys/wait.h>

#include <cstdlib>

#include <json.hpp>

#include "doctest.h"
#include "kohscan/corpus/manifest.hpp"
#include "support.hpp"

using kohscan::testing::slurp;
using kohscan::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args, const TempDir& dir) {
    const fs::path log = dir / "cli.log";
    const std::string cmd = std::string("\"") + KOHSCAN_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

}  // namespace

TEST_CASE("every subcommand documents --seed, --config and --workers") {
    TempDir dir("cli_help");
    for (const char* sub : {"synth", "ingest", "tile", "split", "train", "evaluate", "compare", "scan", "classify",
                            "benchmark", "serve", "repro"}) {
        const Run r = cli(std::string(sub) + " --help", dir);
        INFO(sub);
        CHECK(r.code == 0);
        CHECK(r.out.find("--seed") != std::string::npos);
        CHECK(r.out.find("--config") != std::string::npos);
        CHECK(r.out.find("--workers") != std::string::npos);
    }
    CHECK(cli("", dir).code == 2);
    CHECK(cli("frobnicate", dir).code == 2);
}

TEST_CASE("config values apply and explicit flags override them") {
    TempDir dir("cli_config");
    write(dir / "synth.cfg", "# small corpus\nper_class = 3\nwidth = 1200\nheight = 900\n");
    Run r = cli("synth --config \"" + (dir / "synth.cfg").string() + "\" --out \"" + (dir / "a").string() + "\"", dir);
    REQUIRE(r.code == 0);
    CHECK(kohscan::corpus::read_manifest(dir / "a" / "manifest.jsonl").stats.slides == 6);

    r = cli("synth --config \"" + (dir / "synth.cfg").string() + "\" --per-class 1 --out \"" + (dir / "b").string() +
                "\"",
            dir);
    REQUIRE(r.code == 0);
    CHECK(kohscan::corpus::read_manifest(dir / "b" / "manifest.jsonl").stats.slides == 2);

    write(dir / "bad.cfg", "colour = red\n");
    r = cli("synth --config \"" + (dir / "bad.cfg").string() + "\" --out \"" + (dir / "c").string() + "\"", dir);
    CHECK(r.code == 2);
    CHECK(r.out.find("unknown key colour") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "c"));
}

TEST_CASE("repro with zero epochs fails at the train stage") {
    TempDir dir("cli_repro");
    const Run r = cli("repro --epochs 0 --out \"" + (dir / "out").string() + "\"", dir);
    CHECK(r.code == 3);
    CHECK(r.out.find("error: train: epochs must be at least 1") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out" / "corpus"));
}

TEST_CASE("missing inputs are reported with nonzero exit codes") {
    TempDir dir("cli_errors");
    Run r = cli("scan --image nowhere.png", dir);
    CHECK(r.code == 2);
    CHECK(r.out.find("--bundle") != std::string::npos);
    r = cli("split --manifest \"" + (dir / "absent.jsonl").string() + "\"", dir);
    CHECK(r.code != 0);
    r = cli("split --manifest x --group-by slide", dir);
    CHECK(r.code != 0);
}
