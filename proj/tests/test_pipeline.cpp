// End-to-end tests that drive the installed command-line binary the way a
// user would: generate data, train, resume, evaluate, verify gradients and
// inspect checkpoints, checking exit codes and on-disk artifacts.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using doctest::String;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

const char* binary() {
  const char* bin = std::getenv("DEMT_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "DEMT_BIN must point at the CLI binary");
  return bin;
}

CmdResult run_cmd(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + binary() + " " +
                          args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  std::array<char, 4096> buf;
  size_t got = 0;
  while ((got = fread(buf.data(), 1, buf.size(), pipe)) > 0) {
    r.out.append(buf.data(), got);
  }
  const int status = pclose(pipe);
  REQUIRE(status != -1);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

CmdResult run_ok(const std::string& args, const std::string& env = "") {
  CmdResult r = run_cmd(args, env);
  CHECK_MESSAGE(r.code == 0, args, "\n", r.out);
  return r;
}

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::path("pipeline_tmp") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(bool(in), path.string());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  REQUIRE(bool(out));
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

// Small enough to train in milliseconds, big enough to exercise every stage.
const std::string kDataFlags =
    "--set data.count=6 --set data.height=32 --set data.width=32 "
    "--set data.classes=5";
const std::string kTinyModel =
    " --set model.widths=2,4,6,8 --set model.reduced_channels=4 "
    "--set train.batch_size=2";

std::string gen_into(const fs::path& dir) {
  run_ok("gen " + kDataFlags + " --out " + dir.string());
  return dir.string();
}

std::string train_flags(const std::string& data_dir) {
  return kDataFlags + kTinyModel + " --set data.dir=" + data_dir;
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  CHECK(run_cmd("").code == 1);
  CHECK(run_cmd("destroy").code == 1);
  CHECK(run_cmd("gen --frobnicate").code == 1);
  CHECK(run_cmd("eval").code == 1);  // --ckpt is mandatory
  CHECK(run_cmd("inspect").code == 1);
  CHECK(run_cmd("gen --set bogus.key=1").code == 1);
  CHECK(run_cmd("gen --set data.count=abc").code == 1);
  CHECK(run_cmd("train --set train.steps=0 --set data.dir=nowhere").code !=
        0);
  const CmdResult usage = run_cmd("");
  CHECK(contains(usage.out, "usage:"));
  CHECK(contains(usage.out, "gradcheck"));
}

TEST_CASE("gen writes a reproducible dataset") {
  const fs::path root = fresh_dir("gen");
  const CmdResult r = run_ok("gen " + kDataFlags + " --out " +
                             (root / "a").string());
  CHECK(contains(r.out, "wrote 6 samples 32x32 classes=5 split=train"));
  CHECK(fs::exists(root / "a" / "manifest.txt"));
  CHECK(fs::exists(root / "a" / "resolved_config.txt"));
  for (int i = 0; i < 6; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%06d.dmt", i);
    CHECK_MESSAGE(fs::exists(root / "a" / name), name);
  }
  CHECK(!fs::exists(root / "a" / "sample_000006.dmt"));

  run_ok("gen " + kDataFlags + " --out " + (root / "b").string());
  CHECK(read_file(root / "a" / "manifest.txt") ==
        read_file(root / "b" / "manifest.txt"));
  CHECK(read_file(root / "a" / "sample_000000.dmt") ==
        read_file(root / "b" / "sample_000000.dmt"));
  CHECK(read_file(root / "a" / "sample_000005.dmt") ==
        read_file(root / "b" / "sample_000005.dmt"));

  // A different data seed changes the pixels.
  run_ok("gen " + kDataFlags + " --set data.seed=99 --out " +
         (root / "c").string());
  CHECK(read_file(root / "a" / "sample_000000.dmt") !=
        read_file(root / "c" / "sample_000000.dmt"));

  CHECK(run_cmd("gen --set data.count=0 --out " + (root / "d").string())
            .code == 1);
}

TEST_CASE("missing files and malformed configs map to exit codes") {
  const fs::path root = fresh_dir("errors");
  CHECK(run_cmd("train --set data.dir=" + (root / "absent").string()).code ==
        2);
  CHECK(run_cmd("train --config " + (root / "no_such.cfg").string()).code ==
        2);
  write_file(root / "bad.cfg", "mystery.key = 1\n");
  CHECK(run_cmd("train --config " + (root / "bad.cfg").string()).code == 1);
  write_file(root / "broken.cfg", "train.steps\n");
  const CmdResult r =
      run_cmd("train --config " + (root / "broken.cfg").string());
  CHECK(r.code == 1);
  CHECK(contains(r.out, "broken.cfg"));
  CHECK(run_cmd("eval --ckpt " + (root / "absent.dmtc").string()).code == 2);
  CHECK(run_cmd("inspect --ckpt " + (root / "absent.dmtc").string()).code ==
        2);
}

TEST_CASE("train writes logs and checkpoints deterministically") {
  const fs::path root = fresh_dir("train");
  const std::string data = gen_into(root / "ds");
  const std::string flags = train_flags(data) +
                            " --set train.steps=6 "
                            "--set train.checkpoint_every=3 --out ";

  const CmdResult r = run_ok("train " + flags + (root / "a").string());
  CHECK(contains(r.out, "step=1 total="));
  CHECK(contains(r.out, "step=6 total="));
  CHECK(contains(r.out, "final total="));
  CHECK(contains(r.out, "saved " + (root / "a" / "ckpt_final.dmtc").string()));

  const std::string log = read_file(root / "a" / "train_log.txt");
  const std::vector<std::string> lines = lines_of(log);
  REQUIRE(lines.size() == 7);  // six steps plus the final summary
  for (int i = 0; i < 6; ++i) {
    CHECK(lines[i].rfind("step=" + std::to_string(i + 1) + " total=", 0) ==
          0);
    CHECK(contains(lines[i], " semseg="));
    CHECK(contains(lines[i], " depth="));
    CHECK(contains(lines[i], " normal="));
  }
  CHECK(lines[6].rfind("final total=", 0) == 0);

  // Periodic snapshots skip the final step; the final snapshot has its own
  // name.
  CHECK(fs::exists(root / "a" / "ckpt_000003.dmtc"));
  CHECK(!fs::exists(root / "a" / "ckpt_000006.dmtc"));
  CHECK(fs::exists(root / "a" / "ckpt_final.dmtc"));

  run_ok("train " + flags + (root / "b").string());
  CHECK(read_file(root / "a" / "train_log.txt") ==
        read_file(root / "b" / "train_log.txt"));
  CHECK(read_file(root / "a" / "ckpt_final.dmtc") ==
        read_file(root / "b" / "ckpt_final.dmtc"));
  CHECK(read_file(root / "a" / "resolved_config.txt") ==
        read_file(root / "b" / "resolved_config.txt"));
}

TEST_CASE("training resumes bitwise from a checkpoint") {
  const fs::path root = fresh_dir("resume");
  const std::string data = gen_into(root / "ds");
  const std::string flags =
      train_flags(data) + " --set train.steps=10 "
                          "--set train.checkpoint_every=5";

  run_ok("train " + flags + " --out " + (root / "full").string());
  REQUIRE(fs::exists(root / "full" / "ckpt_000005.dmtc"));

  run_ok("train " + flags + " --ckpt " +
         (root / "full" / "ckpt_000005.dmtc").string() + " --out " +
         (root / "resumed").string());

  const std::vector<std::string> full =
      lines_of(read_file(root / "full" / "train_log.txt"));
  const std::vector<std::string> resumed =
      lines_of(read_file(root / "resumed" / "train_log.txt"));
  REQUIRE(full.size() == 11);
  REQUIRE(resumed.size() == 6);  // steps 6..10 plus the final line
  for (size_t i = 0; i < resumed.size(); ++i) {
    CHECK(resumed[i] == full[i + 5]);
  }
  CHECK(read_file(root / "full" / "ckpt_final.dmtc") ==
        read_file(root / "resumed" / "ckpt_final.dmtc"));
}

TEST_CASE("evaluation reproduces training losses and reports metrics") {
  const fs::path root = fresh_dir("eval");
  const std::string data = gen_into(root / "ds");
  run_ok("train " + train_flags(data) +
         " --set train.steps=6 --out " + (root / "run").string());
  const std::vector<std::string> log =
      lines_of(read_file(root / "run" / "train_log.txt"));

  const CmdResult r = run_ok("eval --ckpt " +
                             (root / "run" / "ckpt_final.dmtc").string() +
                             " --out " + (root / "ev").string());
  const std::vector<std::string> out = lines_of(r.out);
  REQUIRE(!out.empty());
  // The trainer's closing line is reproduced exactly, digit for digit.
  CHECK(out[0] == log.back());
  CHECK(contains(r.out, "task=semseg metric=miou value="));
  CHECK(contains(r.out, "task=depth metric=rmse value="));
  CHECK(contains(r.out, "task=normal metric=merr value="));
  CHECK(!contains(r.out, "delta_m"));

  const std::string report = read_file(root / "ev" / "report.txt");
  CHECK(report == r.out);

  const CmdResult again = run_ok("eval --ckpt " +
                                 (root / "run" / "ckpt_final.dmtc").string() +
                                 " --out " + (root / "ev2").string());
  CHECK(again.out == r.out);
}

TEST_CASE("evaluation compares against a single-task reference") {
  const fs::path root = fresh_dir("delta");
  const std::string data = gen_into(root / "ds");
  run_ok("train " + train_flags(data) +
         " --set train.steps=4 --out " + (root / "run").string());
  const std::string ckpt = (root / "run" / "ckpt_final.dmtc").string();

  write_file(root / "ref.txt",
             "task=semseg metric=miou value=0.500000\n"
             "task=depth metric=rmse value=1.000000\n"
             "task=normal metric=merr value=30.000000\n");
  const CmdResult r = run_ok("eval --ckpt " + ckpt + " --single-task-ref " +
                             (root / "ref.txt").string() + " --out " +
                             (root / "ev").string());
  CHECK(contains(r.out, "delta_m="));
  CHECK(contains(read_file(root / "ev" / "report.txt"), "delta_m="));

  // A reference that names different tasks cannot be compared.
  write_file(root / "alien.txt", "task=parsing metric=miou value=0.5\n");
  CHECK(run_cmd("eval --ckpt " + ckpt + " --single-task-ref " +
                (root / "alien.txt").string() + " --out " +
                (root / "ev_alien").string())
            .code == 2);

  // A missing reference is reported, skipped, and not an error.
  const CmdResult missing =
      run_ok("eval --ckpt " + ckpt + " --single-task-ref " +
             (root / "nope.txt").string() + " --out " +
             (root / "ev2").string());
  CHECK(contains(missing.out, "delta_m omitted"));
  CHECK(!contains(read_file(root / "ev2" / "report.txt"), "delta_m"));
}

TEST_CASE("corrupted checkpoints are refused with exit code 2") {
  const fs::path root = fresh_dir("corrupt");
  const std::string data = gen_into(root / "ds");
  run_ok("train " + train_flags(data) +
         " --set train.steps=2 --out " + (root / "run").string());
  const std::string good = read_file(root / "run" / "ckpt_final.dmtc");

  std::string versioned = good;
  versioned[4] = 2;
  write_file(root / "v2.dmtc", versioned);
  const CmdResult r =
      run_cmd("eval --ckpt " + (root / "v2.dmtc").string() + " --out " +
              (root / "ev").string());
  CHECK(r.code == 2);
  CHECK(contains(r.out, "version 2"));
  CHECK(contains(r.out, "expected 1"));

  write_file(root / "cut.dmtc", good.substr(0, good.size() / 2));
  CHECK(run_cmd("inspect --ckpt " + (root / "cut.dmtc").string()).code == 2);
}

TEST_CASE("inspect prints the checkpoint inventory") {
  const fs::path root = fresh_dir("inspect");
  const std::string data = gen_into(root / "ds");
  run_ok("train " + train_flags(data) +
         " --set train.steps=3 --out " + (root / "run").string());
  const CmdResult r =
      run_ok("inspect --ckpt " + (root / "run" / "ckpt_final.dmtc").string());
  CHECK(contains(r.out, "version = 1"));
  CHECK(contains(r.out, "step = 3"));
  CHECK(contains(r.out, "model.mode = dm+ti+tq"));
  CHECK(contains(r.out, "trunk.conv1a.weight shape=[2,3,3,3]"));
  CHECK(contains(r.out, "velocity.trunk.conv1a.weight"));
  CHECK(contains(r.out, "decoder.interaction.attn.query.weight"));
  CHECK(contains(r.out, "head.semseg.weight"));
}

TEST_CASE("decoder parameters exist only in the modes that use them") {
  const fs::path root = fresh_dir("modes");
  const std::string data = gen_into(root / "ds");
  const std::string base = "train " + train_flags(data) +
                           " --set train.steps=1 --set model.mode=";

  run_ok(base + "dm --out " + (root / "dm").string());
  const std::string dm =
      run_ok("inspect --ckpt " + (root / "dm" / "ckpt_final.dmtc").string())
          .out;
  CHECK(!contains(dm, "decoder."));
  CHECK(contains(dm, "encoder.semseg."));
  CHECK(contains(dm, "encoder.depth."));

  run_ok(base + "baseline --out " + (root / "baseline").string());
  const std::string baseline =
      run_ok("inspect --ckpt " +
             (root / "baseline" / "ckpt_final.dmtc").string())
          .out;
  CHECK(!contains(baseline, "decoder."));
  CHECK(contains(baseline, "encoder.shared."));
  CHECK(!contains(baseline, "encoder.semseg."));

  run_ok(base + "dm+ti --out " + (root / "ti").string());
  const std::string ti =
      run_ok("inspect --ckpt " + (root / "ti" / "ckpt_final.dmtc").string())
          .out;
  CHECK(contains(ti, "decoder.interaction."));
  CHECK(!contains(ti, "decoder.query."));

  run_ok(base + "dm+ti+tq --out " + (root / "tq").string());
  const std::string tq =
      run_ok("inspect --ckpt " + (root / "tq" / "ckpt_final.dmtc").string())
          .out;
  CHECK(contains(tq, "decoder.interaction."));
  CHECK(contains(tq, "decoder.query."));
}

TEST_CASE("gradient verification passes and honors seed and threads") {
  const CmdResult r = run_ok("gradcheck", "DEMT_THREADS=8");
  CHECK(contains(r.out, "op=matmul"));
  CHECK(contains(r.out, "op=model"));
  CHECK(contains(r.out, "gradcheck passed"));
  CHECK(!contains(r.out, "FAIL"));
  for (const std::string& line : lines_of(r.out)) {
    if (line.rfind("op=", 0) == 0) {
      CHECK(contains(line, "worst_rel_err="));
      CHECK(contains(line, "limit=1e-04"));
      CHECK(contains(line, " pass"));
    }
  }

  // The worker count changes nothing observable.
  const CmdResult serial = run_ok("gradcheck", "DEMT_THREADS=1");
  CHECK(serial.out == r.out);

  // The seed changes the sampled instances, never the verdict.
  const CmdResult seeded = run_ok("gradcheck --seed 7", "DEMT_THREADS=8");
  CHECK(contains(seeded.out, "gradcheck passed"));
  CHECK(seeded.out != r.out);

  CHECK(run_cmd("gradcheck", "DEMT_THREADS=zebra").code == 1);
  CHECK(run_cmd("gradcheck", "DEMT_THREADS=0").code == 1);
}

TEST_CASE("identical seeds reproduce the whole pipeline bitwise") {
  const fs::path root = fresh_dir("repro");
  // Same relative paths from different working directories, so the resolved
  // configurations (and the checkpoints embedding them) can match bitwise.
  for (const char* side : {"x", "y"}) {
    const std::string in = "cd " + fs::absolute(root / side).string() + " &&";
    fs::create_directories(root / side);
    run_ok("gen " + kDataFlags + " --out ds", in);
    run_ok("train " + train_flags("ds") + " --set train.steps=8 --out run",
           in);
    run_ok("eval --ckpt run/ckpt_final.dmtc --out ev", in);
  }
  for (const char* file :
       {"ds/manifest.txt", "ds/sample_000003.dmt", "run/train_log.txt",
        "run/resolved_config.txt", "run/ckpt_final.dmtc",
        "ev/report.txt"}) {
    CHECK_MESSAGE(read_file(root / "x" / file) ==
                      read_file(root / "y" / file),
                  file);
  }
}
