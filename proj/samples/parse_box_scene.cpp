// Parse a moving-box scene from its ground-truth depth, flow and pose, then
// print the segmentation quality and an ASCII map of the moving mask.

#include <cstdio>
#include <cstdlib>
#include <random>

#include "motionparse/hmp.hpp"
#include "motionparse/metrics.hpp"
#include "motionparse/synth.hpp"

using namespace motionparse;

int main(int argc, char** argv) {
  std::mt19937_64 rng(argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 3);
  const auto sc = synth::random_moving_box_scene(rng);
  const auto h = hmp::parse({sc.depth_t, sc.depth_s, sc.flow_t_to_s, sc.flow_s_to_t, sc.geometry.pose, sc.geometry.k,
                             0.01});
  const auto seg = hmp::binary_segmentation(h.m_d);
  const auto r = metrics::eval_segmentation(seg, sc.moving);
  std::printf("pixel acc %.4f  mean IoU %.4f  moving IoU %.4f\n", r.pixel_acc, r.mean_iou, r.class_iou[1]);

  // '#' moving, 'o' not visible in the source, '.' static.
  for (int y = 0; y < seg.height(); y += 2) {
    for (int x = 0; x < seg.width(); ++x) std::putchar(seg(x, y) ? '#' : h.v(x, y) == 0.0 ? 'o' : '.');
    std::putchar('\n');
  }
}
