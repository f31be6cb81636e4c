#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "trinet/data.hpp"

using namespace trinet;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("trinet_data_" + name)).string();
}

std::string write_file(const std::string& name, const std::string& content) {
  const std::string path = tmp_path(name);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  return path;
}

void push_be32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

std::string write_bytes(const std::string& name, const std::vector<unsigned char>& bytes) {
  const std::string path = tmp_path(name);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  return path;
}

// A 2-image 28x28 IDX pair: pixel 0 is 255, pixel 1 is 128, the rest follow
// a fixed pattern; labels are {7, 2}.
std::pair<std::string, std::string> idx_fixture() {
  std::vector<unsigned char> img;
  push_be32(img, 0x803);
  push_be32(img, 2);
  push_be32(img, 28);
  push_be32(img, 28);
  for (int i = 0; i < 2 * 784; ++i) img.push_back(static_cast<unsigned char>((i * 7) % 256));
  img[16] = 255;
  img[17] = 128;
  std::vector<unsigned char> lab;
  push_be32(lab, 0x801);
  push_be32(lab, 2);
  lab.push_back(7);
  lab.push_back(2);
  return {write_bytes("fix-images", img), write_bytes("fix-labels", lab)};
}

void check_split_contract(const SplitIndices& s, std::size_t n) {
  std::vector<std::int64_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    CHECK(std::is_sorted(part->begin(), part->end()));
    all.insert(all.end(), part->begin(), part->end());
  }
  CHECK(all.size() == n);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(all[i] == static_cast<std::int64_t>(i));  // disjoint + covering
  }
  const double dn = static_cast<double>(n);
  CHECK(std::abs(static_cast<double>(s.train.size()) - 0.6 * dn) <= 1.0);
  CHECK(std::abs(static_cast<double>(s.val.size()) - 0.2 * dn) <= 1.0);
  CHECK(std::abs(static_cast<double>(s.test.size()) - 0.2 * dn) <= 1.0);
}

}  // namespace

TEST_CASE("csv maps labels by first appearance") {
  const auto path = write_file("labels.csv", "x,y,label\n1.0,2.0,a\n3.0,4.0,b\n1.5,0.5,a\n");
  std::int64_t dropped = -1;
  auto ds = load_csv<double>(path, {"label", {}}, &dropped);
  CHECK(ds.n() == 3);
  CHECK(ds.dim() == 2);
  CHECK(ds.n_classes == 2);
  CHECK(dropped == 0);
  CHECK(ds.y == std::vector<int>{0, 1, 0});
  CHECK(ds.feature_names == std::vector<std::string>{"x", "y"});
  CHECK(ds.X.at(0, 0) == 1.0);
  CHECK(ds.X.at(0, 1) == 2.0);
  CHECK(ds.X.at(1, 0) == 3.0);
  CHECK(ds.X.at(2, 1) == 0.5);
}

TEST_CASE("csv appends one-hot columns in first-appearance order") {
  const auto path = write_file(
      "cat.csv", "f,color,label\n1,red,a\n2,blue,b\n3,red,a\n4,green,b\n");
  auto ds = load_csv<double>(path, {"label", {"color"}});
  CHECK(ds.dim() == 4);
  CHECK(ds.feature_names ==
        std::vector<std::string>{"f", "color=red", "color=blue", "color=green"});
  CHECK(ds.X.at(0, 0) == 1.0);
  CHECK(ds.X.at(0, 1) == 1.0);
  CHECK(ds.X.at(0, 2) == 0.0);
  CHECK(ds.X.at(1, 2) == 1.0);
  CHECK(ds.X.at(3, 3) == 1.0);
  CHECK(ds.X.at(3, 1) == 0.0);
}

TEST_CASE("csv drops rows with missing cells and reports the count") {
  std::string content = "a,b,label\n";
  for (int i = 0; i < 100; ++i) {
    if (i == 37) {
      content += "1.0,?,x\n";
    } else if (i == 62) {
      content += ",2.0,y\n";
    } else {
      content += std::to_string(i) + ",2.0," + (i % 2 ? "y\n" : "x\n");
    }
  }
  const auto path = write_file("missing.csv", content);
  std::int64_t dropped = -1;
  auto ds = load_csv<double>(path, {"label", {}}, &dropped);
  CHECK(ds.n() == 98);
  CHECK(dropped == 2);
}

TEST_CASE("csv rejects malformed inputs") {
  const auto ok = write_file("ok.csv", "a,label\n1,x\n2,y\n");
  CHECK_THROWS_WITH_AS(load_csv<double>(ok, {"klass", {}}), doctest::Contains("klass"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(load_csv<double>(ok, {"label", {"nope"}}), doctest::Contains("nope"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(load_csv<double>(ok, {"label", {"label"}}),
                       doctest::Contains("categorical"), std::runtime_error);
  CHECK_THROWS_AS(load_csv<double>(tmp_path("does-not-exist.csv"), {"label", {}}),
                  std::runtime_error);
  const auto empty = write_file("empty.csv", "");
  CHECK_THROWS_WITH_AS(load_csv<double>(empty, {"label", {}}), doctest::Contains("empty"),
                       std::runtime_error);
  const auto headonly = write_file("headonly.csv", "a,label\n");
  CHECK_THROWS_WITH_AS(load_csv<double>(headonly, {"label", {}}),
                       doctest::Contains("no usable data rows"), std::runtime_error);
  const auto text = write_file("text.csv", "a,label\nhello,x\n");
  CHECK_THROWS_WITH_AS(load_csv<double>(text, {"label", {}}), doctest::Contains("hello"),
                       std::runtime_error);
  const auto nan = write_file("nan.csv", "a,label\nnan,x\n");
  CHECK_THROWS_AS(load_csv<double>(nan, {"label", {}}), std::runtime_error);
  const auto inf = write_file("inf.csv", "a,label\ninf,x\n");
  CHECK_THROWS_AS(load_csv<double>(inf, {"label", {}}), std::runtime_error);
  const auto ragged = write_file("ragged.csv", "a,b,label\n1,2,x\n1,x\n");
  CHECK_THROWS_WITH_AS(load_csv<double>(ragged, {"label", {}}), doctest::Contains("cells"),
                       std::runtime_error);
}

TEST_CASE("idx loads synthetic image and label files") {
  const auto [img, lab] = idx_fixture();
  auto ds = load_idx<double>(img, lab);
  CHECK(ds.n() == 2);
  CHECK(ds.dim() == 784);
  CHECK(ds.X.at(0, 0) == 1.0);
  CHECK(ds.X.at(0, 1) == doctest::Approx(128.0 / 255.0));
  CHECK(ds.y == std::vector<int>{7, 2});
  CHECK(ds.n_classes == 8);
  CHECK(ds.feature_names[0] == "px0");
  CHECK(ds.feature_names[783] == "px783");
  for (double v : ds.X.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("idx rejects malformed headers and sizes") {
  const auto [img, lab] = idx_fixture();

  auto corrupt = [&](const std::string& src, const std::string& name, auto mutate) {
    std::ifstream in(src, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    mutate(bytes);
    return write_bytes(name, bytes);
  };

  const auto bad_img_magic =
      corrupt(img, "bad-magic-img", [](std::vector<unsigned char>& b) { b[3] = 0x02; });
  CHECK_THROWS_WITH_AS(load_idx<double>(bad_img_magic, lab), doctest::Contains("magic"),
                       std::runtime_error);

  const auto bad_lab_magic =
      corrupt(lab, "bad-magic-lab", [](std::vector<unsigned char>& b) { b[3] = 0x05; });
  CHECK_THROWS_WITH_AS(load_idx<double>(img, bad_lab_magic), doctest::Contains("magic"),
                       std::runtime_error);

  const auto lab3 = corrupt(lab, "lab-count", [](std::vector<unsigned char>& b) {
    b[7] = 3;
    b.push_back(1);
  });
  CHECK_THROWS_WITH_AS(load_idx<double>(img, lab3), doctest::Contains("counts differ"),
                       std::runtime_error);

  const auto short_img =
      corrupt(img, "short-img", [](std::vector<unsigned char>& b) { b.pop_back(); });
  CHECK_THROWS_WITH_AS(load_idx<double>(short_img, lab), doctest::Contains("size mismatch"),
                       std::runtime_error);

  const auto stub = write_bytes("stub-img", {0, 0, 8});
  CHECK_THROWS_WITH_AS(load_idx<double>(stub, lab), doctest::Contains("truncated"),
                       std::runtime_error);
}

TEST_CASE("concat stacks rows and unifies the label range") {
  Dataset<double> a, b;
  a.X = Tensor<double>::zeros(2, 3);
  a.X.at(0, 0) = 1.0;
  a.X.at(1, 2) = 2.0;
  a.y = {0, 1};
  a.n_classes = 2;
  a.feature_names = {"p", "q", "r"};
  b.X = Tensor<double>::zeros(1, 3);
  b.X.at(0, 1) = 5.0;
  b.y = {3};
  b.n_classes = 4;
  b.feature_names = a.feature_names;

  auto c = concat_datasets(a, b);
  CHECK(c.n() == 3);
  CHECK(c.dim() == 3);
  CHECK(c.n_classes == 4);
  CHECK(c.y == std::vector<int>{0, 1, 3});
  CHECK(c.X.at(0, 0) == 1.0);
  CHECK(c.X.at(1, 2) == 2.0);
  CHECK(c.X.at(2, 1) == 5.0);
  CHECK(c.feature_names == a.feature_names);

  Dataset<double> wide;
  wide.X = Tensor<double>::zeros(1, 4);
  wide.y = {0};
  wide.n_classes = 1;
  CHECK_THROWS_AS(concat_datasets(a, wide), std::invalid_argument);
}

TEST_CASE("mnist pools train and test into one dataset") {
  const char* dir = std::getenv("TRINET_MNIST_DIR");
  if (!dir) {
    MESSAGE("TRINET_MNIST_DIR not set; skipping");
    return;
  }
  auto ds = load_mnist<float>(dir);
  CHECK(ds.n() == 70000);
  CHECK(ds.dim() == 784);
  CHECK(ds.n_classes == 10);
  CHECK(ds.y[0] == 5);       // first train label
  CHECK(ds.y[60000] == 7);   // first test label
  float lo = 1.0f, hi = 0.0f;
  for (std::int64_t j = 0; j < 784; ++j) {
    lo = std::min(lo, ds.X.at(0, j));
    hi = std::max(hi, ds.X.at(0, j));
  }
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);
}

TEST_CASE("split hits exact 60/20/20 sizes and is seed-stable") {
  std::vector<int> y(100);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 4);
  bool stratified = false;
  auto s = make_split(y, 4, 7, &stratified);
  CHECK(stratified);
  CHECK(s.train.size() == 60);
  CHECK(s.val.size() == 20);
  CHECK(s.test.size() == 20);
  check_split_contract(s, 100);

  auto s2 = make_split(y, 4, 7);
  CHECK(s.train == s2.train);
  CHECK(s.val == s2.val);
  CHECK(s.test == s2.test);

  auto s3 = make_split(y, 4, 8);
  CHECK(s.train != s3.train);
}

TEST_CASE("split keeps every class in every part") {
  std::vector<int> y = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = make_split(y, 2, seed);
    check_split_contract(s, y.size());
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      std::set<int> seen;
      for (auto i : *part) seen.insert(y[static_cast<std::size_t>(i)]);
      CHECK(seen.size() == 2);
    }
  }
}

TEST_CASE("split size error stays bounded on awkward class counts") {
  // 10 classes of 7: independent per-class rounding would land far from the
  // 60/20/20 targets; the carry correction must keep totals within one.
  std::vector<int> y;
  for (int c = 0; c < 10; ++c) {
    for (int i = 0; i < 7; ++i) y.push_back(c);
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = make_split(y, 10, seed, nullptr);
    check_split_contract(s, y.size());
  }
  std::vector<int> ragged;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < (c == 0 ? 23 : 17); ++i) ragged.push_back(c);
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    check_split_contract(make_split(ragged, 3, seed), ragged.size());
  }
}

TEST_CASE("split falls back to unstratified when a class is tiny") {
  std::vector<int> y = {0, 0, 0, 0, 0, 1, 1};
  bool stratified = true;
  auto s = make_split(y, 2, 3, &stratified);
  CHECK_FALSE(stratified);
  check_split_contract(s, y.size());
}

TEST_CASE("split validates inputs") {
  CHECK_THROWS_AS(make_split({0, 1, 0, 1}, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_split({0, 1, 2, 3, 7}, 4, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_split({0, 1, 0, 1, -1}, 2, 0), std::invalid_argument);
}

TEST_CASE("fixed-test split pins the test set across run seeds") {
  std::vector<int> y(60);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 3);
  bool stratified = false;
  auto a = make_split_fixed_test(y, 3, 11, 1, &stratified);
  CHECK(stratified);
  auto b = make_split_fixed_test(y, 3, 11, 2);
  CHECK(a.test == b.test);
  CHECK(a.train != b.train);
  CHECK(a.test.size() == 12);
  CHECK(a.train.size() == 36);
  CHECK(a.val.size() == 12);
  check_split_contract(a, y.size());
  check_split_contract(b, y.size());

  auto c = make_split_fixed_test(y, 3, 11, 2);
  CHECK(b.train == c.train);
  CHECK(b.val == c.val);
  CHECK(b.test == c.test);

  auto d = make_split_fixed_test(y, 3, 12, 1);
  CHECK(a.test != d.test);
}

namespace {

Dataset<double> toy_dataset() {
  Dataset<double> ds;
  ds.X = Tensor<double>::zeros(10, 3);
  for (std::int64_t i = 0; i < 10; ++i) {
    ds.X.at(i, 0) = 5.0;  // constant feature
    ds.X.at(i, 1) = static_cast<double>(i);
    ds.X.at(i, 2) = 0.25 * static_cast<double>((i * 13) % 7) - 1.0;
  }
  ds.y.resize(10);
  for (std::size_t i = 0; i < 10; ++i) ds.y[i] = static_cast<int>(i % 2);
  ds.n_classes = 2;
  ds.feature_names = {"a", "b", "c"};
  return ds;
}

}  // namespace

TEST_CASE("normalize z-scores with train statistics only") {
  auto ds = toy_dataset();
  const auto orig = ds.X;
  CHECK_THROWS_AS(normalize(ds), std::logic_error);  // split not assigned yet
  assign_split(ds, 5);
  normalize(ds);

  CHECK(ds.mean[0] == 5.0);
  CHECK(ds.sd[0] == 0.0);
  for (std::int64_t i = 0; i < 10; ++i) CHECK(ds.X.at(i, 0) == 0.0);

  for (std::int64_t j = 1; j < 3; ++j) {
    double mean = 0.0, sq = 0.0;
    for (auto i : ds.split.train) mean += ds.X.at(i, j);
    mean /= static_cast<double>(ds.split.train.size());
    CHECK(std::abs(mean) < 1e-10);
    for (auto i : ds.split.train) sq += ds.X.at(i, j) * ds.X.at(i, j);
    CHECK(sq / static_cast<double>(ds.split.train.size()) == doctest::Approx(1.0));
  }
  // Val/test rows transform with the stored train stats.
  for (const auto* part : {&ds.split.val, &ds.split.test}) {
    for (auto i : *part) {
      for (std::int64_t j = 1; j < 3; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        CHECK(ds.X.at(i, j) ==
              doctest::Approx((orig.at(i, j) - ds.mean[uj]) / ds.sd[uj]).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(normalize(ds), std::logic_error);  // already normalized
}

TEST_CASE("test rows cannot influence train-time tensors") {
  auto clean = toy_dataset();
  auto poisoned = toy_dataset();
  assign_split(clean, 5);
  assign_split(poisoned, 5);
  for (auto i : poisoned.split.test) {
    for (std::int64_t j = 0; j < 3; ++j) poisoned.X.at(i, j) += 100.0;
  }
  normalize(clean);
  normalize(poisoned);
  CHECK(clean.mean == poisoned.mean);
  CHECK(clean.sd == poisoned.sd);
  for (auto i : clean.split.train) {
    for (std::int64_t j = 0; j < 3; ++j) CHECK(clean.X.at(i, j) == poisoned.X.at(i, j));
  }
  for (auto i : clean.split.val) {
    for (std::int64_t j = 0; j < 3; ++j) CHECK(clean.X.at(i, j) == poisoned.X.at(i, j));
  }
}

TEST_CASE("cache round trip is bit identical") {
  auto ds = toy_dataset();
  assign_split(ds, 9);
  normalize(ds);
  const auto path = tmp_path("cache.bin");
  save_cache(path, ds);
  auto back = load_cache<double>(path);
  CHECK(back.X.shape == ds.X.shape);
  CHECK(back.X.data == ds.X.data);
  CHECK(back.y == ds.y);
  CHECK(back.n_classes == ds.n_classes);
  CHECK(back.feature_names == ds.feature_names);
  CHECK(back.mean == ds.mean);
  CHECK(back.sd == ds.sd);
  CHECK(back.split.train == ds.split.train);
  CHECK(back.split.val == ds.split.val);
  CHECK(back.split.test == ds.split.test);

  auto plain = toy_dataset();  // no split, no stats
  const auto path2 = tmp_path("cache-plain.bin");
  save_cache(path2, plain);
  auto back2 = load_cache<double>(path2);
  CHECK(back2.X.data == plain.X.data);
  CHECK_FALSE(back2.normalized());
  CHECK(back2.split.empty());
}

TEST_CASE("cache rejects foreign and damaged files") {
  CHECK_THROWS_AS(load_cache<double>(tmp_path("no-such-cache.bin")), std::runtime_error);

  const auto junk = write_file("junk.bin", "definitely not a cache file");
  CHECK_THROWS_WITH_AS(load_cache<double>(junk), doctest::Contains("not a dataset cache"),
                       std::runtime_error);

  auto ds = toy_dataset();
  const auto path = tmp_path("cache-width.bin");
  save_cache(path, ds);
  CHECK_THROWS_WITH_AS(load_cache<float>(path), doctest::Contains("64-bit"),
                       std::runtime_error);

  const auto cut = tmp_path("cache-cut.bin");
  std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(cut, std::filesystem::file_size(cut) - 8);
  CHECK_THROWS_WITH_AS(load_cache<double>(cut), doctest::Contains("truncated"),
                       std::runtime_error);
}
