#include <math.h>
#include <stdio.h>
#include "pacloud.h"

#define CHECK(call)                                                            \
  do {                                                                         \
    PacloudStatus s_ = (call);                                                 \
    if (s_ != PACLOUD_STATUS_OK) {                                             \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,                  \
              pacloud_last_error_message());                                   \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  double xyz[] = {0.02, 0, 0, -0.02, 0, 0, 0, 0.02, 0, 0, 0, 0.02, 0, 0, -0.02};
  double ball[] = {0.001, 0.0, 0.0, 1.0, 5e-4};
  PacloudSensorArray *array = NULL;
  PacloudCloud *cloud = NULL;
  PacloudSignals *sig = NULL;
  CHECK(pacloud_array_new(xyz, 5, 1500.0, &array));
  CHECK(pacloud_cloud_new(ball, 1, &cloud));
  CHECK(pacloud_simulate(array, cloud, 0.0, 5e-8, 512, &sig));
  size_t ns = 0, nt = 0;
  CHECK(pacloud_signals_info(sig, &ns, &nt, NULL, NULL));
  double loss = -1;
  CHECK(pacloud_loss(sig, sig, &loss));
  if (ns != 5 || nt != 512 || loss != 0.0) {
    fprintf(stderr, "unexpected shape or loss\n");
    return 1;
  }
  if (pacloud_cloud_new(ball, 1, NULL) != PACLOUD_STATUS_NULL_POINTER) return 1;
  if (pacloud_last_error_message() == NULL) return 1;
  pacloud_signals_free(sig);
  pacloud_cloud_free(cloud);
  pacloud_array_free(array);
  printf("ok %s\n", pacloud_version());
  return 0;
}
