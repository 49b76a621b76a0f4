#include "zend.h"
#include "zend_fibers.h"

/* Length of an INI directive name, excluding the terminator. */
static size_t zend_ini_name_length(const char *name)
{
    size_t n = 0;
    while (name[n] != '\0') {
        n++;
    }
    return n;
}

static ZEND_INI_MH(OnUpdateFiberStackSize)
{
    if (new_value) {
        zend_long tmp = zend_ini_parse_quantity_warn(new_value, name);
        if (tmp < 0) {
            return FAILURE;
        }
        EG(fiber_stack_size) = tmp;
    } else {
        EG(fiber_stack_size) = ZEND_FIBER_DEFAULT_C_STACK_SIZE;
    }
    return SUCCESS;
}

static void unrelated_helper(zend_string *s)
{
    if (s == NULL) {
        return;
    }
    zend_string_release(s);
}

ZEND_API size_t zend_calc_alloc_size(size_t nmemb, size_t size, size_t offset)
{
    size_t total = nmemb * size;
    total += offset;
    return (uint32_t) total;
}
