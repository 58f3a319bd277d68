#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "pan/commands.hpp"
#include "pan/error.hpp"

using namespace pan;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("pan_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

RunConfig small_data_config(const fs::path& dir) {
  RunConfig c;
  c.data_dir = (dir / "data").string();
  c.out_dir = (dir / "out").string();
  c.n_train = 4;
  c.n_val = 3;
  return c;
}

}  // namespace

TEST_CASE("config parse and serialize round trip") {
  RunConfig c;
  CHECK(parse_run_config(serialize_run_config(c)) == c);

  c.seed = 123;
  c.data_dir = "some dir/with \"quotes\"";
  c.train.base_lr = 0.1 + 0.2;
  c.scales = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
  c.flip = true;
  c.variants = {"C357+AVE+GP", "GAU+GP+1x1"};
  c.stage_channels = {8, 16, 24, 32};
  c.center = "se";
  const RunConfig back = parse_run_config(serialize_run_config(c));
  CHECK(back == c);
  CHECK(serialize_run_config(back) == serialize_run_config(c));
}

TEST_CASE("config text with sections and comments") {
  const RunConfig c = parse_run_config(
      "# top comment\nseed = 11\nout_dir = runs/a   # trailing\n\n[train]\nmax_iter = 5\nbase_lr = 0.01\n"
      "[eval]\nscales = 0.5, 1.0\nflip = true\n[ablate]\nrepeat = 3\n");
  CHECK(c.seed == 11);
  CHECK(c.out_dir == "runs/a");
  CHECK(c.train.max_iter == 5);
  CHECK(c.train.base_lr == 0.01);
  CHECK(c.scales == std::vector<double>{0.5, 1.0});
  CHECK(c.flip);
  CHECK(c.repeat == 3);
}

TEST_CASE("unknown, duplicate and malformed keys are errors") {
  try {
    parse_run_config("[train]\nmax_itr = 5\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "train.max_itr");
    CHECK(std::string(e.what()).find("train.max_iter") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_run_config("seed = 1\nseed = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train\nmax_iter = 5\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train]\nmax_iter 5\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train]\nmax_iter = five\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[eval]\nflip = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[nosuch]\nkey = 1\n"), ConfigError);
}

TEST_CASE("overrides and validation") {
  RunConfig c;
  apply_override(c, "train.max_iter=9");
  apply_override(c, "seed=5");
  apply_override(c, "model.center=none");
  CHECK(c.train.max_iter == 9);
  CHECK(c.seed == 5);
  CHECK(c.center == "none");
  CHECK_THROWS_AS(apply_override(c, "train.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "no-equals-sign"), ConfigError);

  RunConfig bad;
  bad.center = "aspp";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.train.crop = 50;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.scales = {1.0, -0.5};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const auto keys = config_keys();
  CHECK(std::find(keys.begin(), keys.end(), "ablate.repeat") != keys.end());
  CHECK(std::find(keys.begin(), keys.end(), "seed") != keys.end());
}

TEST_CASE("derived configs follow the run config") {
  RunConfig c;
  c.center = "se";
  c.gau_blocks = 0;
  const PanConfig p = c.pan_config();
  REQUIRE(p.fpa.has_value());
  CHECK(p.fpa->variant == FpaVariant::se);
  CHECK(p.gau_chain.empty());
  CHECK(c.train_config().seed == c.seed);
  CHECK(c.dataset_spec(false).seed != c.dataset_spec(true).seed);
  CHECK(c.checkpoint_path() == (fs::path("runs") / "checkpoint.bin").string());
  c.checkpoint = "x.bin";
  CHECK(c.checkpoint_path() == "x.bin");
  CHECK(RunConfig{}.pan_config().fpa->label() == "C357+AVE+GP");
}

TEST_CASE("palette follows the VOC bit rule") {
  const auto& p = voc_palette();
  CHECK(p[0] == Color{0, 0, 0});
  CHECK(p[1] == Color{128, 0, 0});
  CHECK(p[2] == Color{0, 128, 0});
  CHECK(p[3] == Color{128, 128, 0});
  CHECK(p[4] == Color{0, 0, 128});
  CHECK(p[15] == Color{192, 128, 128});
  CHECK(p[255] == Color{224, 224, 192});

  IntTensor mask({2, 2});
  mask.data = {0, 1, 3, 255};
  const Tensor img = colorize(mask);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::int64_t ch = 0; ch < 3; ++ch) {
      CHECK(img[ch * 4 + static_cast<std::int64_t>(i)] ==
            p[static_cast<std::size_t>(mask.data[i])][static_cast<std::size_t>(ch)] / 255.0);
    }
}

TEST_CASE("predicted mask keeps the input extent for any image size") {
  PanModel model(PanConfig::desk(4), 3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{50, 37}, {64, 64}, {17, 80}}) {
    Tensor img({3, h, w});
    for (double& v : img.data()) v = u(rng);
    const IntTensor m = predict_mask(model, img);
    CHECK(m.shape == Shape{h, w});
    for (auto v : m.data) {
      CHECK(v >= 0);
      CHECK(v < 4);
    }
  }
}

TEST_CASE("ablation grid labels and selection") {
  RunConfig c;
  const auto all = ablation_variants(c);
  std::vector<std::string> labels, ids;
  for (const auto& v : all) {
    labels.push_back(v.label);
    ids.push_back(v.id);
  }
  CHECK(labels == std::vector<std::string>{
                      "ResNet101", "ResNet101+SE", "ResNet101+C333+MAX", "ResNet101+C333+AVE",
                      "ResNet101+C333+MAX+GP", "ResNet101+C333+AVE+GP", "ResNet101+C357+MAX",
                      "ResNet101+C357+AVE", "ResNet101+C357+MAX+GP", "ResNet101+C357+AVE+GP", "ResNet101+GAU",
                      "ResNet101+GAU", "ResNet101+GAU"});
  CHECK(ids.back() == "GAU+GP+3x3");
  CHECK(all[10].gp == false);
  CHECK(all[10].reduce_3x3);
  CHECK(all[11].gp);
  CHECK(all[11].reduce_1x1);

  // baseline: no center block and no decoder
  CHECK_FALSE(all[0].config.fpa.has_value());
  CHECK(all[0].config.gau_chain.empty());
  // GAU rows change only the decoder
  CHECK_FALSE(all[12].config.fpa.has_value());
  CHECK(all[12].config.gau_chain.size() == 3);

  c.grid = "fpa";
  CHECK(ablation_variants(c).size() == 10);
  c.grid = "gau";
  CHECK(ablation_variants(c).size() == 4);
  c.variants = {"GAU+3x3", "baseline"};
  const auto picked = ablation_variants(c);
  REQUIRE(picked.size() == 2);
  CHECK(picked[0].id == "GAU+3x3");
  c.variants = {"C999"};
  try {
    ablation_variants(c);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("GAU+GP+1x1") != std::string::npos);
  }
  for (const auto& v : all) CHECK_NOTHROW(v.config.validate());
}

TEST_CASE("aggregation helpers") {
  CHECK(mean_of({1.0, 2.0, 6.0}) == 3.0);
  CHECK(stddev_of({1.0, 2.0, 6.0}) == doctest::Approx(std::sqrt(7.0)));
  CHECK(stddev_of({4.0}) == 0.0);
}

TEST_CASE("gen-data is deterministic and writes parseable manifests") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  std::ostringstream log;
  CHECK(cmd_gen_data(small_data_config(a), log) == 0);
  CHECK(cmd_gen_data(small_data_config(b), log) == 0);
  CHECK(cmd_gen_data(small_data_config(b), log) == 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a / "data")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), a / "data");
    CHECK(slurp(e.path()) == slurp(b / "data" / rel));
  }
  CHECK(files == 2 * (4 + 3) + 2);
  const auto train = read_manifest(a / "data" / "train.txt");
  const auto val = read_manifest(a / "data" / "val.txt");
  CHECK(train.size() == 4);
  CHECK(val.size() == 3);
  CHECK(load_dataset(a / "data" / "val.txt").size() == 3);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("command-line exit codes") {
  const fs::path dir = scratch("exit");
  const std::string d = " --data-dir " + (dir / "data").string() + " --out-dir " + (dir / "out").string();
  CHECK(run_cli("") == 1);
  CHECK(run_cli("bogus-command") == 1);
  CHECK(run_cli("train --no-such-flag") == 1);
  CHECK(run_cli("train --set train.max_itr=3" + d) == 1);
  CHECK(run_cli("ablate --grid nope" + d) == 1);
  CHECK(run_cli("eval" + d) == 2);
  CHECK(run_cli("gen-data --set data.n_train=2 --set data.n_val=2" + d) == 0);
  CHECK(run_cli("train --max-iter 1 --set train.batch_size=2" + d) == 0);
  CHECK(fs::exists(dir / "out" / "checkpoint.bin"));
  std::ifstream log(dir / "out" / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 1);
  CHECK(run_cli("predict --image " + (dir / "missing.ppm").string() + d) == 2);
  CHECK(run_cli("gradcheck --inject-fault --samples 5" + d) == 2);
  fs::remove_all(dir);
}
