#include "php.h"
#include "smart_buf.h"

int smart_buf_append(smart_buf *buf, const char *src, size_t len)
{
    size_t room_avail = buf->cap - buf->len;
    if (len > room_avail + 1) {
        return FAILURE;
    }
    memcpy(buf->data + buf->len, src, len);
    buf->len += len;
    return SUCCESS;
}

void smart_buf_reset(smart_buf *buf)
{
    buf->len = 0;
}
