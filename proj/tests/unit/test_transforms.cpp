#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "helpers.hpp"
#include "scalenet/error.hpp"
#include "scalenet/transforms.hpp"

using namespace scalenet;
using testutil::random_image;

namespace {

// Where output pixel (r, c) of a counterclockwise quarter turn reads from.
double rotated_source(const ImageTensor& in, int y, int r, int c, int ch) {
  const int h = in.height(), w = in.width();
  switch (y) {
    case 0: return in.at(r, c, ch);
    case 1: return in.at(c, w - 1 - r, ch);
    case 2: return in.at(h - 1 - r, w - 1 - c, ch);
    default: return in.at(h - 1 - c, r, ch);
  }
}

std::vector<double> sorted_values(const ImageTensor& img) {
  std::vector<double> v(img.data().begin(), img.data().end());
  std::sort(v.begin(), v.end());
  return v;
}

double bilinear_reference(const ImageTensor& in, double sy, double sx, int ch) {
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, in.height() - 1);
  const int x1 = std::min(x0 + 1, in.width() - 1);
  const double fy = sy - y0, fx = sx - x0;
  const double top = in.at(y0, x0, ch) * (1 - fx) + in.at(y0, x1, ch) * fx;
  const double bottom = in.at(y1, x0, ch) * (1 - fx) + in.at(y1, x1, ch) * fx;
  return top * (1 - fy) + bottom * fy;
}

// Direct 2-D windowed structure tensor, no separable passes.
std::vector<double> harris_reference(const ImageTensor& gray, double sigma, double k) {
  const int h = gray.height(), w = gray.width();
  auto px = [&](int r, int c) { return gray.at(std::clamp(r, 0, h - 1), std::clamp(c, 0, w - 1), 0); };
  const int rad = static_cast<int>(std::ceil(3 * sigma));
  double norm = 0;
  for (int i = -rad; i <= rad; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
  std::vector<double> out(static_cast<std::size_t>(h * w));
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double a = 0, b = 0, d = 0;
      for (int i = -rad; i <= rad; ++i) {
        for (int j = -rad; j <= rad; ++j) {
          const int rr = std::clamp(r + i, 0, h - 1), cc = std::clamp(c + j, 0, w - 1);
          const double gx = 0.5 * (px(rr, cc + 1) - px(rr, cc - 1));
          const double gy = 0.5 * (px(rr + 1, cc) - px(rr - 1, cc));
          const double wt = std::exp(-0.5 * (i * i + j * j) / (sigma * sigma)) / (norm * norm);
          a += wt * gx * gx;
          b += wt * gy * gy;
          d += wt * gx * gy;
        }
      }
      out[static_cast<std::size_t>(r * w + c)] = a * b - d * d - k * (a + b) * (a + b);
    }
  }
  return out;
}

ImageTensor white_square() {
  ImageTensor img(24, 24, 1);
  for (int r = 6; r < 18; ++r)
    for (int c = 6; c < 18; ++c) img.at(r, c, 0) = 255;
  return img;
}

}  // namespace

TEST_SUITE("rotation") {
  TEST_CASE("2x2 quarter turn") {
    ImageTensor img(2, 2, 1, {1, 2, 3, 4});
    const auto out = rotate_quarter(img, 1);
    CHECK(out == ImageTensor(2, 2, 1, {2, 4, 1, 3}));
    CHECK(rotate_quarter(img, 2) == ImageTensor(2, 2, 1, {4, 3, 2, 1}));
  }

  TEST_CASE("matches index formula on non-square images") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto img = random_image(5 + static_cast<int>(s % 4), 7, 3, s);
      for (int y = 0; y < 4; ++y) {
        const auto out = rotate_quarter(img, y);
        REQUIRE(out.height() == (y % 2 ? img.width() : img.height()));
        REQUIRE(out.width() == (y % 2 ? img.height() : img.width()));
        for (int r = 0; r < out.height(); ++r)
          for (int c = 0; c < out.width(); ++c)
            for (int ch = 0; ch < 3; ++ch) REQUIRE(out.at(r, c, ch) == rotated_source(img, y, r, c, ch));
      }
    }
  }

  TEST_CASE("group law, order four and multiset preservation") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      const auto img = random_image(6, 9, 3, 100 + s, false);
      CHECK(rotate_quarter(img, 0) == img);
      auto four = img;
      for (int i = 0; i < 4; ++i) four = rotate_quarter(four, 1);
      CHECK(four == img);
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) CHECK(rotate_quarter(rotate_quarter(img, a), b) == rotate_quarter(img, (a + b) % 4));
      CHECK(sorted_values(rotate_quarter(img, 3)) == sorted_values(img));
    }
  }

  TEST_CASE("label outside 0..3 is rejected") {
    const auto img = random_image(4, 4, 1, 1);
    CHECK_THROWS_AS(rotate_quarter(img, 4), ArgumentError);
    CHECK_THROWS_AS(rotate_quarter(img, -1), ArgumentError);
  }
}

TEST_SUITE("resize") {
  TEST_CASE("alpha 1 is the identity") {
    const auto img = random_image(9, 11, 3, 3, false);
    CHECK(resize(img, 1.0) == img);
  }

  TEST_CASE("alpha 0.5 copies even source pixels") {
    const auto img = random_image(32, 32, 3, 4, false);
    const auto out = resize(img, 0.5);
    REQUIRE(out.height() == 16);
    REQUIRE(out.width() == 16);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        for (int ch = 0; ch < 3; ++ch) CHECK(out.at(r, c, ch) == img.at(2 * r, 2 * c, ch));
  }

  TEST_CASE("matches scalar bilinear reference") {
    for (double alpha : {0.75, 0.6, 0.33}) {
      const auto img = random_image(32, 30, 3, 5, false);
      const auto out = resize(img, alpha);
      REQUIRE(out.height() == static_cast<int>(std::floor(alpha * 32)));
      REQUIRE(out.width() == static_cast<int>(std::floor(alpha * 30)));
      for (int r = 0; r < out.height(); ++r)
        for (int c = 0; c < out.width(); ++c)
          for (int ch = 0; ch < 3; ++ch)
            CHECK(std::abs(out.at(r, c, ch) - bilinear_reference(img, r / alpha, c / alpha, ch)) < 1e-6);
    }
  }

  TEST_CASE("constant image stays constant") {
    ImageTensor img(20, 20, 3);
    for (auto& v : img.data()) v = 77.0;
    for (auto v : resize(img, 0.65).data()) CHECK(v == doctest::Approx(77.0).epsilon(1e-12));
  }

  TEST_CASE("invalid alpha and degenerate output") {
    const auto img = random_image(8, 8, 1, 6);
    CHECK_THROWS_AS(resize(img, 0.0), ArgumentError);
    CHECK_THROWS_AS(resize(img, 1.5), ArgumentError);
    CHECK_THROWS_AS(resize(img, -0.5), ArgumentError);
    CHECK_THROWS_AS(resize(img, 0.2), DegenerateSizeError);
  }
}

TEST_SUITE("standardize") {
  TEST_CASE("train statistics give zero mean and unit std per channel") {
    const auto set = testutil::random_images(20, 8, 8, 3, 11);
    const auto out = standardize(set);
    for (int ch = 0; ch < 3; ++ch) {
      double sum = 0, sq = 0, n = 0;
      for (const auto& img : out.images)
        for (int r = 0; r < 8; ++r)
          for (int c = 0; c < 8; ++c) {
            const double v = img.at(r, c, ch);
            sum += v;
            sq += v * v;
            ++n;
          }
      CHECK(std::abs(sum / n) < 1e-9);
      CHECK(std::abs(std::sqrt(sq / n) - 1.0) < 1e-9);
    }
    CHECK(out.images.front().value_range() == ValueRange::standardized);
  }

  TEST_CASE("held-out split reuses train statistics") {
    const auto& data = testutil::tiny_labeled();
    const ImageSet train(data.images.begin(), data.images.begin() + 200);
    const ImageSet held(data.images.begin() + 200, data.images.end());
    const auto st = standardize(train);
    const auto out = apply_standardization(held, st.stats);
    for (int ch = 0; ch < 3; ++ch) {
      double sum = 0, n = 0;
      for (const auto& img : out)
        for (int r = 0; r < img.height(); ++r)
          for (int c = 0; c < img.width(); ++c) {
            sum += img.at(r, c, ch);
            ++n;
          }
      CHECK(std::abs(sum / n) < 0.5);
    }
  }

  TEST_CASE("zero variance channel raises a stats error") {
    ImageSet set(3, ImageTensor(4, 4, 3));
    for (auto& img : set)
      for (auto& v : img.data()) v = 10;
    CHECK_THROWS_AS(standardize(set), StatsError);
  }
}

TEST_SUITE("grayscale") {
  TEST_CASE("luminance weights") {
    ImageTensor red(2, 2, 3);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) red.at(r, c, 0) = 255;
    const auto g = to_pseudo_grayscale(red);
    for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(g.at(0, 0, ch) - 76.245) < 1e-9);
  }

  TEST_CASE("gray pixels are fixed, channels equal, idempotent") {
    auto img = random_image(6, 6, 3, 12);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) img.at(r, c, 1) = img.at(r, c, 2) = img.at(r, c, 0);
    const auto g = to_pseudo_grayscale(img);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c)
        for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(g.at(r, c, ch) - img.at(r, c, 0)) < 1e-9);

    const auto color = random_image(6, 6, 3, 13);
    const auto once = to_pseudo_grayscale(color);
    const auto twice = to_pseudo_grayscale(once);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(once.data()[i] - twice.data()[i]) < 1e-9);
  }

  TEST_CASE("single channel input is rejected") {
    CHECK_THROWS_AS(to_pseudo_grayscale(random_image(4, 4, 1, 1)), ArgumentError);
  }
}

TEST_SUITE("harris") {
  TEST_CASE("response matches direct 2-D reference") {
    for (const auto& img : {white_square(), random_image(12, 10, 1, 21, false)}) {
      const auto got = harris_response(img, {});
      const auto want = harris_reference(img, 1.0, 0.04);
      double scale = 0;
      for (double v : want) scale = std::max(scale, std::abs(v));
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-9 * scale);
    }
  }

  TEST_CASE("white square: corners detected, edge midpoints not") {
    const auto mask = harris_corners(white_square());
    for (auto [r, c] : {std::pair{6, 6}, {6, 17}, {17, 6}, {17, 17}}) CHECK(mask.at(r, c));
    CHECK_FALSE(mask.at(6, 11));
    CHECK_FALSE(mask.at(12, 6));
    CHECK_FALSE(mask.at(12, 12));
    CHECK_FALSE(mask.at(0, 0));
  }

  TEST_CASE("constant image has no corners") {
    ImageTensor img(10, 10, 3);
    for (auto& v : img.data()) v = 128;
    CHECK(harris_corners(img).count() == 0);
    CHECK(harris_whiten(img) == img);
  }

  TEST_CASE("half-turn invariance away from the threshold") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto img = random_image(14, 14, 3, 40 + s);
      const auto rot = rotate_quarter(img, 2);
      const auto resp = harris_response(img, {});
      const auto m = harris_corners(img);
      const auto mr = harris_corners(rot);
      const double peak = *std::max_element(resp.begin(), resp.end());
      for (int r = 0; r < 14; ++r)
        for (int c = 0; c < 14; ++c) {
          if (std::abs(resp[static_cast<std::size_t>(r * 14 + c)] - 0.01 * peak) < 1e-9 * peak) continue;
          CHECK(m.at(r, c) == mr.at(13 - r, 13 - c));
        }
    }
  }

  TEST_CASE("parameter validation") {
    HarrisParams p;
    p.k = 0.2;
    CHECK_THROWS_AS(harris_corners(white_square(), p), ArgumentError);
    p = {};
    p.window_sigma = 0;
    CHECK_THROWS_AS(harris_corners(white_square(), p), ArgumentError);
  }
}

TEST_SUITE("corner removal") {
  TEST_CASE("whitens exactly the masked pixels") {
    const auto img = random_image(10, 12, 3, 50);
    CornerMask mask(10, 12, {});
    std::mt19937_64 rng(3);
    for (int r = 0; r < 10; ++r)
      for (int c = 0; c < 12; ++c) mask.set(r, c, rng() % 5 == 0);
    const auto out = remove_corners(img, mask);
    std::size_t changed = 0;
    for (int r = 0; r < 10; ++r)
      for (int c = 0; c < 12; ++c) {
        bool white = true;
        for (int ch = 0; ch < 3; ++ch) {
          if (mask.at(r, c)) white = white && out.at(r, c, ch) == 255;
          else CHECK(out.at(r, c, ch) == img.at(r, c, ch));
        }
        if (mask.at(r, c)) {
          CHECK(white);
          ++changed;
        }
      }
    CHECK(changed == mask.count());
    CHECK(remove_corners(img, CornerMask(10, 12, {})) == img);
  }

  TEST_CASE("full mask gives a white image") {
    const auto img = random_image(4, 4, 3, 51);
    CornerMask mask(4, 4, {});
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) mask.set(r, c, true);
    const auto out = remove_corners(img, mask);
    for (double v : out.data()) CHECK(v == 255);
  }

  TEST_CASE("mask shape mismatch") {
    CHECK_THROWS_AS(remove_corners(random_image(4, 4, 3, 1), CornerMask(4, 5, {})), ArgumentError);
  }
}

TEST_SUITE("hybrid") {
  TEST_CASE("probability extremes") {
    const auto set = testutil::random_images(20, 8, 8, 3, 60);
    const auto none = make_hybrid(set, 0.0, 1);
    CHECK(none.images == set);
    CHECK(std::count(none.modified.begin(), none.modified.end(), true) == 0);
    const auto all = make_hybrid(set, 1.0, 1);
    CHECK(std::count(all.modified.begin(), all.modified.end(), true) == 20);
    for (std::size_t i = 0; i < set.size(); ++i) CHECK(all.images[i] == harris_whiten(set[i]));
  }

  TEST_CASE("half of 10000 images are modified, deterministically") {
    const ImageSet set(10000, white_square());
    const auto a = make_hybrid(set, 0.5, 123);
    const auto n = std::count(a.modified.begin(), a.modified.end(), true);
    CHECK(n >= 4700);
    CHECK(n <= 5300);
    CHECK(make_hybrid(set, 0.5, 123).modified == a.modified);
    CHECK(make_hybrid(set, 0.5, 124).modified != a.modified);
  }

  TEST_CASE("probability outside [0, 1]") {
    const auto set = testutil::random_images(2, 8, 8, 3, 61);
    CHECK_THROWS_AS(make_hybrid(set, 1.5, 0), ArgumentError);
    CHECK_THROWS_AS(make_hybrid(set, -0.1, 0), ArgumentError);
  }
}
