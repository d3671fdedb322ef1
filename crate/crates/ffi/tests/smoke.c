#include <stdio.h>
#include <string.h>
#include "cts.h"

int main(void) {
    CtsDataset *ds = NULL;
    CtsModel *model = NULL;
    CtsTicket *ticket = NULL;
    double best = 0.0;
    if (cts_dataset_blobs(2, 2, 100, 3, &ds) != CTS_STATUS_OK) return 1;
    if (cts_model_new(CTS_ARCH_TINY_MLP, ds, 1, &model) != CTS_STATUS_OK) return 2;
    if (cts_oracle(model, ds, 0.5, CTS_OBJECTIVE_TASK_LOSS, 32, &ticket, &best) != CTS_STATUS_OK) return 3;
    if (cts_ticket_len(ticket) != 12 || cts_ticket_retained(ticket) != 6) return 4;
    if (cts_model_maskable_count(NULL, NULL) != CTS_STATUS_NULL_POINTER) return 5;
    if (cts_last_error() == NULL || strstr(cts_last_error(), "null") == NULL) return 6;
    printf("%s %zu\n", cts_version(), cts_ticket_retained(ticket));
    cts_ticket_free(ticket);
    cts_model_free(model);
    cts_dataset_free(ds);
    return 0;
}
